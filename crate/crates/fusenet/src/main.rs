fn main() {
    std::process::exit(fusenet::cli::run(std::env::args_os()));
}
