fn main() {
    std::process::exit(sparsemp::cli::main_with(std::env::args_os()));
}
