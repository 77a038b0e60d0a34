fn main() {
    std::process::exit(regionsel::cli::run(std::env::args_os()));
}
