fn main() {
    std::process::exit(lhcf::cli::run(std::env::args_os()));
}
