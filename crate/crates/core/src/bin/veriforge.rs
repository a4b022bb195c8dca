fn main() {
    std::process::exit(veriforge::cli::run(std::env::args_os()));
}
