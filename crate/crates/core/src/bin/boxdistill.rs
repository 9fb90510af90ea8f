fn main() {
    std::process::exit(boxdistill::cli::run(std::env::args_os()));
}
