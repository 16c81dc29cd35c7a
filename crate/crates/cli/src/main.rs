fn main() {
    std::process::exit(prefixguard_cli::main_with_args(std::env::args_os()));
}
