fn main() -> std::process::ExitCode {
    grpo_lambda::cli::main()
}
