fn main() {
    std::process::exit(ragnet_cli::run(std::env::args_os()));
}
