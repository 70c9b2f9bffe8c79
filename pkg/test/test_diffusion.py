"""
Test suite for the diffusion autoencoder
"""
import pytest
import torch
from torch import nn

from cldis.DiffusionAutoencoder import (
    ConditionalDenoiser,
    DiffAeConfig,
    DiffusionAutoencoder,
    SemanticEncoder,
    ddim_invert,
    ddim_step,
    denoising_loss,
    encode_semantic,
    forward_diffuse,
    make_linear_schedule,
    predict_x0,
    sample,
    strided_schedule,
)
from cldis.cldis_errors import PreconditionError


class OracleDenoiser(nn.Module):
    """Returns the exact noise that separates ``x_t`` from a known ``x0``."""
    def __init__(self, x0, schedule):
        super(OracleDenoiser, self).__init__()
        self.x0 = x0
        self.schedule = schedule

    def forward(self, x_t, t, z_sem):
        alpha_bar = self.schedule.alpha_bar[t].to(x_t.dtype).view(-1, 1, 1, 1)
        return (x_t - alpha_bar.sqrt() * self.x0) / (1 - alpha_bar).sqrt()


class ConstantDenoiser(nn.Module):
    def __init__(self, value):
        super(ConstantDenoiser, self).__init__()
        self.value = value

    def forward(self, x_t, t, z_sem):
        return self.value.expand_as(x_t)


class TestSchedule:
    """
    Test the linear noise schedule and the sampler step schedules
    """
    def test_single_step(self):
        schedule = make_linear_schedule(1, 0.1, 0.1)
        assert torch.allclose(schedule.alpha_bar, torch.tensor([0.9], dtype=torch.float64))

    def test_two_steps(self):
        schedule = make_linear_schedule(2, 0.1, 0.1)
        assert abs(float(schedule.alpha_bar[1]) - 0.81) < 1e-12

    def test_strictly_decreasing(self):
        schedule = make_linear_schedule(1000, 1e-4, 0.02)
        assert schedule.T == 1000
        assert bool((schedule.alpha_bar[1:] < schedule.alpha_bar[:-1]).all())
        assert bool((schedule.sigma == 0).all())
        assert float(schedule.alpha_bar[0]) == float(schedule.alpha[0])

    @pytest.mark.parametrize('start,end', [(0.0, 0.02), (0.03, 0.02), (0.1, 1.0)])
    def test_invalid_range(self, start, end):
        with pytest.raises(PreconditionError):
            make_linear_schedule(10, start, end)

    def test_strided(self):
        steps = strided_schedule(1000, 50)
        assert len(steps) == 50
        assert steps[0] == 999 and steps[-1] == 0
        assert all(a > b for a, b in zip(steps, steps[1:]))

    def test_strided_capped(self):
        assert strided_schedule(5, 20) == [4, 3, 2, 1, 0]


class TestForwardProcess:
    """
    Test the closed-form forward process and its inverse
    """
    def test_zero_noise(self):
        schedule = make_linear_schedule(100, 1e-4, 0.02)
        x0 = torch.rand(2, 3, 4, 4)
        x_t = forward_diffuse(x0, 40, torch.zeros_like(x0), schedule)
        assert torch.allclose(x_t, x0 * schedule.alpha_bar[40].sqrt().float())

    def test_known_value(self):
        schedule = make_linear_schedule(1, 0.64, 0.64)
        x_t = forward_diffuse(torch.zeros(1, 1, 2, 2), 0, torch.ones(1, 1, 2, 2), schedule)
        assert torch.allclose(x_t, torch.full((1, 1, 2, 2), 0.8))

    def test_large_t_is_noise(self):
        schedule = make_linear_schedule(1000, 1e-4, 0.02)
        x0 = torch.rand(1, 3, 4, 4)
        eps = torch.randn(1, 3, 4, 4)
        assert (forward_diffuse(x0, 999, eps, schedule) - eps).abs().max() < 0.05

    def test_shape_mismatch(self):
        schedule = make_linear_schedule(10, 1e-4, 0.02)
        with pytest.raises(PreconditionError):
            forward_diffuse(torch.zeros(1, 3, 4, 4), 0, torch.zeros(1, 3, 4, 5), schedule)

    def test_predict_x0_inverts(self):
        schedule = make_linear_schedule(1000, 1e-4, 0.02)
        generator = torch.Generator().manual_seed(0)
        worst = 0.0
        for _ in range(100):
            x0 = torch.rand(1, 3, 8, 8, generator=generator)
            eps = torch.randn(1, 3, 8, 8, generator=generator)
            t = int(torch.randint(0, 1000, (1,), generator=generator))
            x_t = forward_diffuse(x0, t, eps, schedule)
            worst = max(worst, float((predict_x0(x_t, eps, t, schedule) - x0).abs().max()))
        assert worst < 1e-4

    def test_predict_x0_zero_eps(self):
        schedule = make_linear_schedule(100, 1e-4, 0.02)
        x_t = torch.randn(2, 1, 4, 4)
        expected = x_t / schedule.alpha_bar[10].sqrt().float()
        assert torch.allclose(predict_x0(x_t, torch.zeros_like(x_t), 10, schedule), expected)

    def test_batched_timesteps(self):
        schedule = make_linear_schedule(100, 1e-4, 0.02)
        x0 = torch.rand(3, 1, 4, 4)
        eps = torch.randn(3, 1, 4, 4)
        t = torch.tensor([0, 50, 99])
        batched = forward_diffuse(x0, t, eps, schedule)
        for i in range(3):
            single = forward_diffuse(x0[i:i + 1], int(t[i]), eps[i:i + 1], schedule)
            assert torch.allclose(batched[i:i + 1], single)


class TestDdim:
    """
    Test deterministic sampling and inversion
    """
    @pytest.fixture
    def schedule(self):
        return make_linear_schedule(100, 1e-4, 0.02)

    def test_final_step_is_x0_hat(self, schedule):
        x_t = torch.randn(2, 1, 4, 4)
        eps_hat = torch.randn(2, 1, 4, 4)
        assert torch.allclose(ddim_step(x_t, eps_hat, 5, -1, schedule), predict_x0(x_t, eps_hat, 5, schedule))

    def test_true_noise_follows_trajectory(self, schedule):
        x0 = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        eps = torch.randn(1, 3, 4, 4, dtype=torch.float64)
        x_t = forward_diffuse(x0, 60, eps, schedule)
        stepped = ddim_step(x_t, eps, 60, 20, schedule)
        assert torch.allclose(stepped, forward_diffuse(x0, 20, eps, schedule), atol=1e-10)

    def test_order_enforced(self, schedule):
        x = torch.zeros(1, 1, 4, 4)
        with pytest.raises(PreconditionError):
            ddim_step(x, x, 10, 10, schedule)

    def test_oracle_sampler_recovers_x0(self, schedule):
        x0 = torch.rand(2, 3, 4, 4, dtype=torch.float64)
        x_T = torch.randn(2, 3, 4, 4, dtype=torch.float64)
        out = sample(OracleDenoiser(x0, schedule), None, x_T, list(range(99, -1, -1)), schedule)
        assert (out - x0).abs().max() < 1e-4

    def test_empty_schedule(self, schedule):
        x = torch.zeros(1, 1, 4, 4)
        with pytest.raises(PreconditionError):
            sample(ConstantDenoiser(torch.zeros(1)), None, x, [], schedule)

    def test_schedule_must_end_at_zero(self, schedule):
        x = torch.zeros(1, 1, 4, 4)
        with pytest.raises(PreconditionError):
            sample(ConstantDenoiser(torch.zeros(1)), None, x, [50, 10], schedule)

    def test_inversion_round_trip(self, schedule):
        x0 = torch.rand(2, 1, 4, 4, dtype=torch.float64)
        denoiser = ConstantDenoiser(torch.randn(1, 1, 4, 4, dtype=torch.float64))
        steps = strided_schedule(100, 10)
        x_T = ddim_invert(denoiser, x0, None, steps, schedule)
        assert torch.allclose(sample(denoiser, None, x_T, steps, schedule), x0, atol=1e-8)


class TestNetworks:
    """
    Test the semantic encoder, the denoiser and the autoencoder wrapper
    """
    def test_encoder_deterministic_and_batched(self):
        torch.manual_seed(0)
        encoder = SemanticEncoder((3, 32, 32), 32, channels=8).eval()
        x = torch.rand(4, 3, 32, 32)
        z = encode_semantic(encoder, x)
        assert z.shape == (4, 32)
        assert torch.equal(z, encode_semantic(encoder, x))
        assert torch.allclose(z[2:3], encode_semantic(encoder, x[2:3]), atol=1e-6)

    def test_encoder_shape_mismatch(self):
        encoder = SemanticEncoder((3, 32, 32), 32, channels=8)
        with pytest.raises(PreconditionError):
            encoder(torch.rand(1, 1, 32, 32))

    def test_denoiser_keeps_shape(self):
        denoiser = ConditionalDenoiser((3, 16, 16), cond_dim=4, channels=8)
        x = torch.randn(2, 3, 16, 16)
        out = denoiser(x, torch.tensor([0, 7]), torch.randn(2, 4))
        assert out.shape == x.shape

    def test_denoiser_needs_divisible_size(self):
        with pytest.raises(PreconditionError):
            ConditionalDenoiser((3, 18, 16), cond_dim=4, channels=8)

    def test_untrained_sample_finite_and_deterministic(self):
        torch.manual_seed(1)
        diffae = DiffusionAutoencoder(DiffAeConfig((1, 16, 16), latent_dim=4, unet_channels=8,
                                                   encoder_channels=8, timesteps=50)).eval()
        z = torch.randn(2, 4)
        x_T = torch.randn(2, 1, 16, 16)
        a = diffae.decode(z, x_T, steps=5)
        b = diffae.decode(z, x_T, steps=5)
        assert a.shape == x_T.shape
        assert bool(torch.isfinite(a).all())
        assert torch.equal(a, b)

    def test_latent_conditions_generation(self):
        torch.manual_seed(2)
        diffae = DiffusionAutoencoder(DiffAeConfig((1, 16, 16), latent_dim=4, unet_channels=8,
                                                   encoder_channels=8, timesteps=50)).eval()
        x_T = torch.randn(1, 1, 16, 16)
        a = diffae.decode(torch.zeros(1, 4), x_T, steps=5)
        b = diffae.decode(torch.full((1, 4), 3.0), x_T, steps=5)
        assert float((a - b).norm()) > 0

    def test_reconstruct_shape(self):
        diffae = DiffusionAutoencoder(DiffAeConfig((1, 16, 16), latent_dim=4, unet_channels=8,
                                                   encoder_channels=8, timesteps=50)).eval()
        x0 = torch.rand(2, 1, 16, 16)
        assert diffae.reconstruct(x0, steps=4).shape == x0.shape


class TestDenoisingLoss:
    """
    Test the denoising objective and its gradients
    """
    def test_zero_for_oracle(self):
        schedule = make_linear_schedule(100, 1e-4, 0.02)
        x0 = torch.rand(2, 1, 4, 4, dtype=torch.float64)
        eps = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        loss = denoising_loss(OracleDenoiser(x0, schedule), x0, None, torch.tensor([3, 70]), eps, schedule)
        assert float(loss) < 1e-12

    def test_nonnegative(self):
        schedule = make_linear_schedule(100, 1e-4, 0.02)
        denoiser = ConditionalDenoiser((1, 8, 8), cond_dim=3, channels=8)
        x0 = torch.rand(4, 1, 8, 8)
        loss = denoising_loss(denoiser, x0, torch.randn(4, 3), torch.randint(0, 100, (4,)), torch.randn_like(x0), schedule)
        assert float(loss) >= 0

    def test_gradient(self, finite_difference_check):
        torch.manual_seed(3)
        schedule = make_linear_schedule(100, 1e-4, 0.02)
        denoiser = ConditionalDenoiser((1, 8, 8), cond_dim=3, channels=8).double()
        x0 = torch.rand(2, 1, 8, 8, dtype=torch.float64)
        z = torch.randn(2, 3, dtype=torch.float64)
        eps = torch.randn(2, 1, 8, 8, dtype=torch.float64)
        t = torch.tensor([10, 80])

        def loss():
            return denoising_loss(denoiser, x0, z, t, eps, schedule)

        finite_difference_check(loss, [denoiser.out_conv.weight, denoiser.down1.cond_proj.weight,
                                       denoiser.mid1.conv1.weight, denoiser.in_conv.bias])
