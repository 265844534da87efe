fn main() {
    std::process::exit(miram_cli::run(std::env::args_os()));
}
