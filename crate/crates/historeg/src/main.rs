fn main() {
    std::process::exit(historeg::cli::run());
}
