fn main() {
    fedreweight::cli::main();
}
