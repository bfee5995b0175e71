fn main() {
    std::process::exit(unpci_cli::main_with_args(std::env::args_os()));
}
