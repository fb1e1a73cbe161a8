fn main() {
    std::process::exit(nsldp::cli::main_with_args(std::env::args_os()));
}
