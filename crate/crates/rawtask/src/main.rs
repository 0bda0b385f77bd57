fn main() {
    std::process::exit(rawtask::cli::main_with(std::env::args_os()));
}
