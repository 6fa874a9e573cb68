fn main() {
    std::process::exit(decidenet::cli::main_with_args(std::env::args_os()));
}
