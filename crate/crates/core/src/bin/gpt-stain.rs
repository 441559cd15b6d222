fn main() {
    std::process::exit(gpt_stain::cli::main());
}
