fn main() -> std::process::ExitCode {
    anseg_cli::main_entry()
}
