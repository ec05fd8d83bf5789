// temporary probe: richer FD on the failing coordinate
use odt_core::autodiff::ScanMode;
use odt_core::blocks::{Asba, ModelConfig};
use odt_core::params::{Forward, Init, ParamStore};
use odt_core::tensor::Tensor;

fn main() {
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(3);
    let model = Asba::new(&mut store, &mut init, ModelConfig::tiny(2)).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut bump = Init::new(41);
    for id in ids.clone() {
        let name = store.name(id).to_string();
        if name.ends_with("weight") && store.get(id).iter().all(|&v| v == 0.0) {
            let t = bump.trunc_normal(store.get(id).shape().to_vec(), 0.03);
            store.set(id, t);
        }
    }
    let m = Tensor::from_fn(vec![1usize, 1, 8, 4], |i| 0.5 + 0.3 * ((i as f64) * 0.7).sin());
    let p = Tensor::from_fn(vec![1usize, 1, 8, 4], |i| ((i as f64) * 1.3).sin() * 3.0);

    let eval = |store: &ParamStore<f64>| -> f64 {
        let fx = Forward::new(store, false);
        let out = model
            .forward(&fx, &fx.input(m.clone()), &fx.input(p.clone()), ScanMode::Sequential)
            .unwrap();
        let w = Tensor::from_fn(out.flow.shape().to_vec(), |i| ((i as f64) * 0.29).cos());
        let ly = out.flow.mul(&fx.input(w)).unwrap().sum_all().unwrap();
        let lm = out.magnitude.mul(&out.magnitude).unwrap().sum_all().unwrap();
        let lp = out.phase.cos().unwrap().sum_all().unwrap();
        ly.add(&lm).unwrap().add(&lp).unwrap().value().data()[0]
    };

    // analytic
    let fx = Forward::new(&store, true);
    let out = model
        .forward(&fx, &fx.input(m.clone()), &fx.input(p.clone()), ScanMode::Sequential)
        .unwrap();
    let w = Tensor::from_fn(out.flow.shape().to_vec(), |i| ((i as f64) * 0.29).cos());
    let ly = out.flow.mul(&fx.input(w)).unwrap().sum_all().unwrap();
    let lm = out.magnitude.mul(&out.magnitude).unwrap().sum_all().unwrap();
    let lp = out.phase.cos().unwrap().sum_all().unwrap();
    let loss = ly.add(&lm).unwrap().add(&lp).unwrap();
    loss.backward().unwrap();

    let target = ids
        .iter()
        .find(|id| store.name(**id) == "mag.group0.layer0.rcab0.conv1.bias")
        .copied()
        .unwrap();
    let an = fx.param_grad(target);
    println!("analytic[2] = {:.15e}", an.data()[2]);
    let base = store.get(target).clone();
    for h in [1e-3f64, 1e-4, 1e-5, 1e-6] {
        let mut up_t = base.clone();
        up_t.data_mut()[2] += h;
        store.set(target, up_t);
        let up = eval(&store);
        let mut dn_t = base.clone();
        dn_t.data_mut()[2] -= h;
        store.set(target, dn_t);
        let dn = eval(&store);
        store.set(target, base.clone());
        println!("h={h:.0e}  fd = {:.15e}", (up - dn) / (2.0 * h));
    }
}
