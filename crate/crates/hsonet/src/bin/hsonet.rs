fn main() {
    std::process::exit(hsonet::cli::run(std::env::args_os()));
}
