fn main() {
    std::process::exit(ssunet::cli::main_with_args(std::env::args_os()));
}
