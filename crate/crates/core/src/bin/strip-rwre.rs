fn main() -> std::process::ExitCode {
    strip_rwre::cli::main()
}
