fn main() {
    std::process::exit(mshvit_cli::run(std::env::args_os()));
}
