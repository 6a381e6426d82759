fn main() {
    std::process::exit(captionforge_cli::run(std::env::args_os()));
}
