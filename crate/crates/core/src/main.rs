fn main() {
    std::process::exit(gafsv::cli::run(std::env::args_os()));
}
