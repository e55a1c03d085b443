fn main() -> std::process::ExitCode {
    ogd::cli::main_entry()
}
