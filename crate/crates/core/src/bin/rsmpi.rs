fn main() {
    std::process::exit(rsmpi::cli::main_with_args(std::env::args_os()));
}
