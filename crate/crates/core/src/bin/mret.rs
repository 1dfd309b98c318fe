fn main() -> std::process::ExitCode {
    mret::cli::main()
}
