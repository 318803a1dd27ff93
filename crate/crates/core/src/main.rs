fn main() {
    std::process::exit(titration::cli::main_with_args(std::env::args_os()));
}
