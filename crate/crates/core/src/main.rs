fn main() {
    std::process::exit(resnetlab::cli::main_with_args(std::env::args_os()));
}
