fn main() {
    std::process::exit(qplan_cli::main_with_args(std::env::args_os()));
}
