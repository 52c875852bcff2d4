fn main() {
    std::process::exit(iganet::cli::run(std::env::args_os()));
}
