fn main() {
    std::process::exit(relattn::cli::main_with_args(std::env::args_os()));
}
