fn main() {
    std::process::exit(artopih_cli::main_with_args(std::env::args_os()));
}
