fn main() -> std::process::ExitCode {
    perfmodel::cli::main_with_args(std::env::args_os())
}
