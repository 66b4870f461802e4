fn main() {
    std::process::exit(parswing::cli::main_entry());
}
