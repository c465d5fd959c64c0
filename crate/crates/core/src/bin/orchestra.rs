fn main() {
    std::process::exit(orchestra::cli::run(std::env::args_os()));
}
