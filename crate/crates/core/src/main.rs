fn main() {
    std::process::exit(dockmtl::cli::run(std::env::args_os()));
}
