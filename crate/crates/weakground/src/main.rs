fn main() {
    std::process::exit(weakground::cli::main_entry());
}
