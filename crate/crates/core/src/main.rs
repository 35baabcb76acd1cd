fn main() {
    std::process::exit(expertq::cli::main_with_args(std::env::args_os()));
}
