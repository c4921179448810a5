fn main() {
    std::process::exit(repeton::cli::route(std::env::args_os()));
}
