fn main() {
    std::process::exit(annealvq::cli::main_with_args(std::env::args_os()));
}
