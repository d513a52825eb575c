fn main() {
    std::process::exit(skedit_cli::run(std::env::args_os()));
}
