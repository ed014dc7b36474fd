fn main() {
    std::process::exit(ifam_cli::run(std::env::args_os()));
}
