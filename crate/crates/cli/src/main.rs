fn main() {
    std::process::exit(codelab_cli::run(std::env::args_os()));
}
