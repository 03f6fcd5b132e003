fn main() {
    std::process::exit(minfo_cli::run(std::env::args_os()));
}
