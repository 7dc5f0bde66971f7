fn main() {
    std::process::exit(mmret::cli::run(std::env::args_os()));
}
