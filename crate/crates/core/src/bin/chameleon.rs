fn main() {
    std::process::exit(chameleon::cli::main_with_args(std::env::args_os()));
}
