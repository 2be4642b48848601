fn main() {
    std::process::exit(ragplus::cli::run(std::env::args_os()));
}
