fn main() {
    std::process::exit(glyphdict::cli::main_entry());
}
