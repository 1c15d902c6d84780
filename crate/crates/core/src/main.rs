fn main() {
    std::process::exit(ddmc::cli::run(std::env::args_os()));
}
