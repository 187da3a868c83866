fn main() {
    std::process::exit(iaraudit_cli::run(std::env::args_os()));
}
