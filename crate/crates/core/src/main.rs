fn main() {
    std::process::exit(tldr::cli::main_with_args(std::env::args_os()));
}
