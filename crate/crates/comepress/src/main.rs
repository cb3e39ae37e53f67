fn main() {
    std::process::exit(comepress::run());
}
