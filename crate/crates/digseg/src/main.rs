fn main() {
    std::process::exit(digseg::cli::run());
}
