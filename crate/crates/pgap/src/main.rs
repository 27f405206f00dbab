fn main() {
    std::process::exit(pgap::cli::main_with_args(std::env::args_os()));
}
