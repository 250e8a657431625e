fn main() {
    std::process::exit(vaeve::cli::main_with(std::env::args_os()));
}
