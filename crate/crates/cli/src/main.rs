fn main() {
    std::process::exit(hsgnet_cli::main_with(std::env::args_os()));
}
