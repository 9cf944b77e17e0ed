fn main() {
    std::process::exit(ttafuse_cli::main_with_args(std::env::args_os()));
}
