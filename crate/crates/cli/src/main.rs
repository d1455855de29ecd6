fn main() {
    std::process::exit(supergseg_cli::run(std::env::args_os()));
}
