fn main() -> std::process::ExitCode {
    chanest_cli::run(std::env::args_os())
}
