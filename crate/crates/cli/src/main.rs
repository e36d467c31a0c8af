fn main() {
    std::process::exit(deltafl_cli::main_with_args(std::env::args_os()));
}
