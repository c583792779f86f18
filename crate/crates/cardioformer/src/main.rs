fn main() {
    std::process::exit(cardioformer::run());
}
