fn main() {
    std::process::exit(value_probe::cli::run(std::env::args_os()));
}
