fn main() {
    std::process::exit(ugen_cli::run(std::env::args_os()));
}
