fn main() -> std::process::ExitCode {
    prefixmm::cli::main()
}
