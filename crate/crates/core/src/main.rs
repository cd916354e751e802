fn main() -> std::process::ExitCode {
    conelab::cli::main_with_args(std::env::args_os())
}
