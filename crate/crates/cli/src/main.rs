fn main() {
    println!("vertikit");
}
