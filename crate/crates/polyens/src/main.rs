fn main() {
    std::process::exit(polyens::cli::run(std::env::args_os()));
}
