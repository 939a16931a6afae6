fn main() {
    std::process::exit(bnls::cli::run());
}
