fn main() {
    std::process::exit(siv::cli::run());
}
