fn main() {
    std::process::exit(thermopiezo::cli::run_command(std::env::args_os()));
}
