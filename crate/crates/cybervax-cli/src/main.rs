fn main() {
    std::process::exit(cybervax_cli::run(std::env::args_os()));
}
