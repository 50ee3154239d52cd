fn main() {
    std::process::exit(nnsuppress::cli::main_with_args(std::env::args_os()));
}
