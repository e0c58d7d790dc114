fn main() {
    std::process::exit(nbrselect::cli::main_with_args(std::env::args_os()));
}
