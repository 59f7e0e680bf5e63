fn main() {
    std::process::exit(skeladv::cli::run(std::env::args_os()));
}
