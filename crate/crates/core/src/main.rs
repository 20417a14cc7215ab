fn main() {
    std::process::exit(pideeponet::cli::main_with_args(std::env::args_os()));
}
