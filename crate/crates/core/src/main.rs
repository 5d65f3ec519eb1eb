fn main() {
    std::process::exit(copanet::cli::main_exit_code(std::env::args_os()));
}
