fn main() {
    std::process::exit(dilunet_cli::run(std::env::args_os()));
}
