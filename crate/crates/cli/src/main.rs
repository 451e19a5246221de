fn main() {
    std::process::exit(pad_cli::run(std::env::args_os()));
}
