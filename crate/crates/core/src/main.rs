fn main() {
    std::process::exit(drgan::cli::run(std::env::args_os()));
}
