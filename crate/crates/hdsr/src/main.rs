fn main() {
    std::process::exit(hdsr::cli::run(std::env::args_os()));
}
